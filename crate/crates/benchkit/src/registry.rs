//! Repositories as human-readable on-disk databases of components.
//!
//! A repository is a directory tree with a `.ckr.json` descriptor at the
//! root and components stored two levels deep as `<module>/<data>/`. Each
//! component keeps its documents in a `.cm` directory: `meta.json` (the
//! artifact description), `info.json` (provenance) and `meta-lock.json`
//! (the immutable UID). The registry tracks known repositories in
//! `<config_dir>/repos.json` and always provides two built-ins: `default`
//! (read-only, ships with the tool) and `local` (the writable scratch pad).

use crate::error::{code, Error, Result};
use crate::jsonio;
use crate::lockfile::{self, LockGuard};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

pub const LOCAL_REPO: &str = "local";
pub const DEFAULT_REPO: &str = "default";

const REPO_DESCRIPTOR: &str = ".ckr.json";
const META_DIR: &str = ".cm";
const REPO_LOCK: &str = ".lock";
const REGISTRY_LOCK: &str = ".registry.lock";
const TMP_DIR: &str = "tmp";

/// 16 lowercase hex characters; immutable across renames and moves.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Uid(String);

impl Uid {
    /// Generate a fresh UID from the OS random source.
    pub fn generate() -> Self {
        let mut bytes = [0u8; 8];
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        Uid(hex::encode(bytes))
    }

    /// Accept an existing 16-char lowercase hex string.
    pub fn parse(s: &str) -> Result<Self> {
        if s.len() == 16 && s.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()) {
            Ok(Uid(s.to_string()))
        } else {
            Err(Error::generic(format!(
                "invalid uid {s:?}: expected 16 lowercase hex characters"
            )))
        }
    }

    /// Derive a stable UID from arbitrary input. Used for components in
    /// foreign repositories that carry no `meta-lock.json`.
    pub fn derive(input: &str) -> Self {
        use sha2::Digest;
        let digest = sha2::Sha256::digest(input.as_bytes());
        Uid(hex::encode(&digest[..8]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Looks like a UID (used to decide alias-vs-uid lookup order).
pub fn is_uid_shaped(s: &str) -> bool {
    Uid::parse(s).is_ok()
}

/// `module`, `module:data` or `repo:module:data`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRef {
    pub repo: Option<String>,
    pub module: String,
    pub data: Option<String>,
}

impl ComponentRef {
    pub fn new(module: impl Into<String>, data: impl Into<String>) -> Self {
        Self {
            repo: None,
            module: module.into(),
            data: Some(data.into()),
        }
    }

    pub fn in_repo(repo: impl Into<String>, module: impl Into<String>, data: impl Into<String>) -> Self {
        Self {
            repo: Some(repo.into()),
            module: module.into(),
            data: Some(data.into()),
        }
    }

    pub fn module_only(module: impl Into<String>) -> Self {
        Self {
            repo: None,
            module: module.into(),
            data: None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let make = |repo: Option<&str>, module: &str, data: Option<&str>| -> Result<Self> {
            if module.is_empty() {
                return Err(Error::generic(format!("invalid reference {s:?}: empty module")));
            }
            if data == Some("") || repo == Some("") {
                return Err(Error::generic(format!("invalid reference {s:?}: empty segment")));
            }
            Ok(Self {
                repo: repo.map(str::to_string),
                module: module.to_string(),
                data: data.map(str::to_string),
            })
        };
        match parts.as_slice() {
            [module] => make(None, module, None),
            [module, data] => make(None, module, Some(data)),
            [repo, module, data] => make(Some(repo), module, Some(data)),
            _ => Err(Error::generic(format!(
                "invalid reference {s:?}: expected module[:data] or repo:module:data"
            ))),
        }
    }

    /// The data segment requested, or an error when the operation needs one.
    pub fn required_data(&self) -> Result<&str> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::generic(format!("reference {self} is missing a data name")))
    }
}

impl fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.repo, &self.data) {
            (Some(repo), Some(data)) => write!(f, "{repo}:{}:{data}", self.module),
            (None, Some(data)) => write!(f, "{}:{data}", self.module),
            _ => f.write_str(&self.module),
        }
    }
}

/// A registered repository.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoDescriptor {
    pub name: String,
    pub uid: Uid,
    pub path: PathBuf,
    pub deps: Vec<String>,
}

impl RepoDescriptor {
    pub fn is_read_only(&self) -> bool {
        self.name == DEFAULT_REPO
    }
}

/// One addressable artifact: documents plus a payload directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub repo_name: String,
    pub module_name: String,
    pub data_name: String,
    pub uid: Uid,
    pub meta: Value,
    pub info: Value,
    pub payload_dir: PathBuf,
}

impl Component {
    pub fn to_ref(&self) -> ComponentRef {
        ComponentRef::in_repo(&self.repo_name, &self.module_name, &self.data_name)
    }

    /// Tags from `meta.tags`, normalized to a trimmed lowercase set.
    pub fn tags(&self) -> BTreeSet<String> {
        tags_of(&self.meta)
    }
}

/// Parse the `tags` field of a meta document: a comma-separated string
/// (the stored form) or, leniently, an array of strings.
pub fn tags_of(meta: &Value) -> BTreeSet<String> {
    match meta.get("tags") {
        Some(Value::String(s)) => split_tags(s),
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|v| v.as_str())
            .flat_map(split_tags_iter)
            .collect(),
        _ => BTreeSet::new(),
    }
}

pub fn split_tags(s: &str) -> BTreeSet<String> {
    split_tags_iter(s).collect()
}

fn split_tags_iter(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(',')
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
}

/// Result of pulling a repository.
#[derive(Debug, Clone)]
pub struct PullOutcome {
    pub repo: RepoDescriptor,
    pub already_registered: bool,
    /// Declared dependencies that are not (yet) registered. A warning,
    /// not a failure.
    pub missing_deps: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    uid: Uid,
    path: PathBuf,
    /// Registration sequence; preserves precedence order because the
    /// index file itself stores keys sorted.
    order: u64,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '.' | '_' | '-'))
}

fn has_glob(s: &str) -> bool {
    s.contains('*') || s.contains('?') || s.contains('[')
}

fn now_iso8601() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string()
}

/// Handle on a registry rooted at a config directory. Cheap to clone and
/// safe to send across threads; all state lives on disk.
#[derive(Debug, Clone)]
pub struct Registry {
    config_dir: PathBuf,
}

impl Registry {
    /// Open (and on first use create) the registry under `config_dir`.
    /// Creates the built-in `default` and `local` repositories; calling it
    /// again on the same directory is a no-op.
    pub fn init(config_dir: &Path) -> Result<Registry> {
        std::fs::create_dir_all(config_dir).map_err(|e| {
            Error::io(format!(
                "cannot create local repository: {}: {e}",
                config_dir.display()
            ))
        })?;
        let registry = Registry {
            config_dir: config_dir
                .canonicalize()
                .map_err(|e| Error::io_at(config_dir, e))?,
        };
        let _guard = registry.registry_lock()?;
        let mut index = registry.read_index()?;

        if !index.iter().any(|(n, _)| n == DEFAULT_REPO) {
            let path = registry.config_dir.join(DEFAULT_REPO);
            let uid = registry.create_repo_skeleton(&path, DEFAULT_REPO)?;
            populate_default_repo(&path)?;
            index.push((DEFAULT_REPO.to_string(), IndexEntry { uid, path, order: 0 }));
        }
        if !index.iter().any(|(n, _)| n == LOCAL_REPO) {
            let path = registry.config_dir.join(LOCAL_REPO);
            let uid = registry.create_repo_skeleton(&path, LOCAL_REPO)?;
            index.push((LOCAL_REPO.to_string(), IndexEntry { uid, path, order: 0 }));
        }
        registry.write_index(&index)?;
        Ok(registry)
    }

    pub fn config_dir(&self) -> &Path {
        &self.config_dir
    }

    fn index_path(&self) -> PathBuf {
        self.config_dir.join("repos.json")
    }

    fn registry_lock(&self) -> Result<LockGuard> {
        lockfile::lock_exclusive(&self.config_dir.join(REGISTRY_LOCK))
    }

    fn repo_lock(&self, repo: &RepoDescriptor) -> Result<LockGuard> {
        lockfile::lock_exclusive(&repo.path.join(REPO_LOCK))
    }

    /// Take a repository's single-writer lock for a compound mutation
    /// spanning several documents. Individual operations lock on their
    /// own; never call those while holding this guard.
    pub fn lock_repo(&self, name: &str) -> Result<LockGuard> {
        let repo = self.repo(name)?;
        self.repo_lock(&repo)
    }

    fn create_repo_skeleton(&self, path: &Path, name: &str) -> Result<Uid> {
        std::fs::create_dir_all(path).map_err(|e| {
            Error::io(format!("cannot create local repository: {}: {e}", path.display()))
        })?;
        let descriptor_path = path.join(REPO_DESCRIPTOR);
        if descriptor_path.exists() {
            let doc = jsonio::read_json(&descriptor_path)?;
            return uid_from_descriptor(&doc, &descriptor_path);
        }
        let uid = Uid::generate();
        jsonio::write_json(
            &descriptor_path,
            &json!({
                "name": name,
                "uid": uid,
                "deps": [],
                "format_version": 1,
            }),
        )?;
        Ok(uid)
    }

    fn read_index(&self) -> Result<Vec<(String, IndexEntry)>> {
        let path = self.index_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let doc = jsonio::read_json(&path)?;
        let map = doc
            .as_object()
            .ok_or_else(|| Error::generic(format!("{}: expected an object", path.display())))?;
        let mut entries: Vec<(String, IndexEntry)> = map
            .iter()
            .map(|(name, v)| {
                let entry: IndexEntry = serde_json::from_value(v.clone()).map_err(|e| {
                    Error::generic(format!("{}: bad entry for {name:?}: {e}", path.display()))
                })?;
                Ok((name.clone(), entry))
            })
            .collect::<Result<_>>()?;
        entries.sort_by_key(|(_, e)| e.order);
        Ok(entries)
    }

    fn write_index(&self, entries: &[(String, IndexEntry)]) -> Result<()> {
        let mut map = Map::new();
        for (name, entry) in entries {
            map.insert(name.clone(), serde_json::to_value(entry)?);
        }
        jsonio::write_json(&self.index_path(), &Value::Object(map))
    }

    fn descriptor_for(&self, name: &str, entry: &IndexEntry) -> Result<RepoDescriptor> {
        let descriptor_path = entry.path.join(REPO_DESCRIPTOR);
        let deps = match jsonio::read_json(&descriptor_path) {
            Ok(doc) => doc
                .get("deps")
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(|v| v.as_str().map(str::to_string))
                        .collect()
                })
                .unwrap_or_default(),
            Err(_) => Vec::new(),
        };
        Ok(RepoDescriptor {
            name: name.to_string(),
            uid: entry.uid.clone(),
            path: entry.path.clone(),
            deps,
        })
    }

    /// All repositories in resolution order: `local`, then user
    /// repositories in registration order, then `default`.
    pub fn repos(&self) -> Result<Vec<RepoDescriptor>> {
        let entries = self.read_index()?;
        let mut local = None;
        let mut default = None;
        let mut user = Vec::new();
        for (name, entry) in &entries {
            let descriptor = self.descriptor_for(name, entry)?;
            match name.as_str() {
                LOCAL_REPO => local = Some(descriptor),
                DEFAULT_REPO => default = Some(descriptor),
                _ => user.push(descriptor),
            }
        }
        let mut out = Vec::new();
        out.extend(local);
        out.extend(user);
        out.extend(default);
        Ok(out)
    }

    pub fn repo(&self, name: &str) -> Result<RepoDescriptor> {
        self.repos()?
            .into_iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::not_found(format!("repository {name:?} is not registered")))
    }

    /// Register a repository from an archive, directory or URL.
    pub fn pull_repo(&self, source: &str, name: Option<&str>) -> Result<PullOutcome> {
        let staged = stage_repo_source(source)?;
        let descriptor_doc = jsonio::read_json(&staged.root.join(REPO_DESCRIPTOR))
            .map_err(|_| Error::generic(format!("{source}: not a component repository (missing {REPO_DESCRIPTOR})")))?;
        let repo_name = match name {
            Some(n) => n.to_string(),
            None => descriptor_doc
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::generic(format!("{source}: {REPO_DESCRIPTOR} has no name")))?
                .to_string(),
        };
        if !valid_name(&repo_name) {
            return Err(Error::generic(format!("invalid repository name {repo_name:?}")));
        }
        if repo_name == LOCAL_REPO || repo_name == DEFAULT_REPO {
            return Err(Error::generic(format!(
                "repository name conflict: {repo_name:?} is a built-in repository"
            )));
        }
        let uid = uid_from_descriptor(&descriptor_doc, Path::new(source))?;

        let _guard = self.registry_lock()?;
        let mut index = self.read_index()?;
        if let Some((_, existing)) = index.iter().find(|(n, _)| *n == repo_name) {
            if existing.uid == uid {
                let repo = self.descriptor_for(&repo_name, existing)?;
                let missing_deps = self.missing_deps(&repo, &index);
                return Ok(PullOutcome {
                    repo,
                    already_registered: true,
                    missing_deps,
                });
            }
            return Err(Error::generic(format!(
                "repository name conflict: {repo_name:?} is already registered with a different uid"
            )));
        }

        let dest = self.config_dir.join("repos").join(&repo_name);
        if dest.exists() {
            std::fs::remove_dir_all(&dest).map_err(|e| Error::io_at(&dest, e))?;
        }
        copy_tree(&staged.root, &dest)?;
        let order = index.iter().map(|(_, e)| e.order).max().unwrap_or(0) + 1;
        index.push((
            repo_name.clone(),
            IndexEntry {
                uid: uid.clone(),
                path: dest.clone(),
                order,
            },
        ));
        self.write_index(&index)?;
        let repo = self.descriptor_for(&repo_name, index.last().map(|(_, e)| e).unwrap())?;
        let missing_deps = self.missing_deps(&repo, &index);
        Ok(PullOutcome {
            repo,
            already_registered: false,
            missing_deps,
        })
    }

    fn missing_deps(&self, repo: &RepoDescriptor, index: &[(String, IndexEntry)]) -> Vec<String> {
        repo.deps
            .iter()
            .filter(|dep| !index.iter().any(|(n, _)| n == *dep))
            .cloned()
            .collect()
    }

    /// Unregister a pulled repository and delete its tree. Built-ins stay.
    pub fn remove_repo(&self, name: &str) -> Result<()> {
        if name == LOCAL_REPO || name == DEFAULT_REPO {
            return Err(Error::io(format!("repository {name:?} is built-in and cannot be removed")));
        }
        let _guard = self.registry_lock()?;
        let mut index = self.read_index()?;
        let pos = index
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::not_found(format!("repository {name:?} is not registered")))?;
        let (_, entry) = index.remove(pos);
        self.write_index(&index)?;
        if entry.path.starts_with(&self.config_dir) && entry.path.exists() {
            std::fs::remove_dir_all(&entry.path).map_err(|e| Error::io_at(&entry.path, e))?;
        }
        Ok(())
    }

    fn component_dir(repo: &RepoDescriptor, module: &str, data: &str) -> PathBuf {
        repo.path.join(module).join(data)
    }

    fn writable_repo(&self, ref_repo: Option<&str>) -> Result<RepoDescriptor> {
        let name = ref_repo.unwrap_or(LOCAL_REPO);
        let repo = self.repo(name)?;
        if repo.is_read_only() {
            return Err(Error::io(format!("repository {name:?} is read-only")));
        }
        Ok(repo)
    }

    /// Create a component with fresh (or explicitly supplied) UID.
    pub fn add_component(
        &self,
        reference: &ComponentRef,
        meta: Value,
        info: Option<Value>,
        uid: Option<Uid>,
    ) -> Result<Component> {
        let data = reference.required_data()?;
        if !valid_name(&reference.module) {
            return Err(Error::generic(format!(
                "invalid module name {:?}: allowed charset is [a-z0-9._-]",
                reference.module
            )));
        }
        if !valid_name(data) {
            return Err(Error::generic(format!(
                "invalid data name {data:?}: allowed charset is [a-z0-9._-]"
            )));
        }
        if !meta.is_object() {
            return Err(Error::generic("meta must be a JSON object"));
        }
        let repo = self.writable_repo(reference.repo.as_deref())?;
        let _guard = self.repo_lock(&repo)?;

        let dir = Self::component_dir(&repo, &reference.module, data);
        if dir.join(META_DIR).join("meta.json").exists() {
            return Err(Error::generic(format!(
                "entry already exists: {}:{}:{data}",
                repo.name, reference.module
            )));
        }
        let uid = match uid {
            Some(uid) => {
                if self.find_by_uid(&repo, &reference.module, &uid)?.is_some() {
                    return Err(Error::generic(format!(
                        "entry already exists: uid {uid} is taken in {}:{}",
                        repo.name, reference.module
                    )));
                }
                uid
            }
            None => Uid::generate(),
        };
        let mut info = info.unwrap_or_else(|| json!({}));
        if !info.is_object() {
            return Err(Error::generic("info must be a JSON object"));
        }
        if info.get("created_iso8601").is_none() {
            jsonio::set_dotted(&mut info, "created_iso8601", json!(now_iso8601()));
        }

        let cm = dir.join(META_DIR);
        jsonio::write_json(&cm.join("meta.json"), &meta)?;
        jsonio::write_json(&cm.join("info.json"), &info)?;
        jsonio::write_json(&cm.join("meta-lock.json"), &json!({ "uid": uid }))?;
        Ok(Component {
            repo_name: repo.name,
            module_name: reference.module.clone(),
            data_name: data.to_string(),
            uid,
            meta,
            info,
            payload_dir: dir,
        })
    }

    fn read_component(
        &self,
        repo: &RepoDescriptor,
        module: &str,
        data: &str,
    ) -> Result<Component> {
        let dir = Self::component_dir(repo, module, data);
        let cm = dir.join(META_DIR);
        let meta = jsonio::read_json(&cm.join("meta.json")).map_err(|e| match e.code {
            code::NOT_FOUND => Error::not_found(format!("entry not found: {}:{module}:{data}", repo.name)),
            _ => e,
        })?;
        let info = jsonio::read_json(&cm.join("info.json")).unwrap_or_else(|_| json!({}));
        let uid = match jsonio::read_json(&cm.join("meta-lock.json")) {
            Ok(doc) => doc
                .get("uid")
                .and_then(Value::as_str)
                .map(Uid::parse)
                .transpose()?
                .unwrap_or_else(|| Uid::derive(&format!("{}:{module}:{data}", repo.uid))),
            // Foreign component without a lock file: derive a stable uid.
            Err(_) => Uid::derive(&format!("{}:{module}:{data}", repo.uid)),
        };
        Ok(Component {
            repo_name: repo.name.clone(),
            module_name: module.to_string(),
            data_name: data.to_string(),
            uid,
            meta,
            info,
            payload_dir: dir,
        })
    }

    /// Data names of all components of `module` in `repo`, ascending.
    fn list_data_names(&self, repo: &RepoDescriptor, module: &str) -> Result<Vec<String>> {
        let module_dir = repo.path.join(module);
        if !module_dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut names = Vec::new();
        for entry in std::fs::read_dir(&module_dir).map_err(|e| Error::io_at(&module_dir, e))? {
            let entry = entry.map_err(|e| Error::io_at(&module_dir, e))?;
            let path = entry.path();
            if path.is_dir() && path.join(META_DIR).join("meta.json").is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    names.push(name.to_string());
                }
            }
        }
        names.sort();
        Ok(names)
    }

    fn find_by_uid(
        &self,
        repo: &RepoDescriptor,
        module: &str,
        uid: &Uid,
    ) -> Result<Option<Component>> {
        for data in self.list_data_names(repo, module)? {
            let component = self.read_component(repo, module, &data)?;
            if component.uid == *uid {
                return Ok(Some(component));
            }
        }
        Ok(None)
    }

    fn repos_in_scope(&self, ref_repo: Option<&str>) -> Result<Vec<RepoDescriptor>> {
        match ref_repo {
            Some(name) => Ok(vec![self.repo(name)?]),
            None => self.repos(),
        }
    }

    /// Resolve a reference to a component. Alias match first, then UID,
    /// searching `local`, then user repositories in registration order,
    /// then `default` (unless the reference pins a repository). A glob
    /// pattern must match exactly one component.
    pub fn load_component(&self, reference: &ComponentRef) -> Result<Component> {
        let data = reference.required_data()?;
        let repos = self.repos_in_scope(reference.repo.as_deref())?;

        if has_glob(data) {
            let mut matches = Vec::new();
            for repo in &repos {
                let pattern = glob::Pattern::new(data)
                    .map_err(|e| Error::generic(format!("bad pattern {data:?}: {e}")))?;
                for name in self.list_data_names(repo, &reference.module)? {
                    if pattern.matches(&name) {
                        matches.push(self.read_component(repo, &reference.module, &name)?);
                    }
                }
            }
            return match matches.len() {
                0 => Err(Error::not_found(format!("entry not found: {reference}"))),
                1 => Ok(matches.pop().unwrap()),
                n => Err(Error::generic(format!(
                    "more than one match for {reference}: {n} components"
                ))),
            };
        }

        for repo in &repos {
            let dir = Self::component_dir(repo, &reference.module, data);
            if dir.join(META_DIR).join("meta.json").is_file() {
                return self.read_component(repo, &reference.module, data);
            }
        }
        if let Ok(uid) = Uid::parse(data) {
            for repo in &repos {
                if let Some(component) = self.find_by_uid(repo, &reference.module, &uid)? {
                    return Ok(component);
                }
            }
        }
        Err(Error::not_found(format!("entry not found: {reference}")))
    }

    /// Payload directory of a component.
    pub fn find_component(&self, reference: &ComponentRef) -> Result<PathBuf> {
        Ok(self.load_component(reference)?.payload_dir)
    }

    /// All components of `module` whose tags form a superset of `tags` and
    /// whose data name matches `name_glob` (when given). Ordered by repo
    /// resolution order, then data name ascending.
    pub fn search_components(
        &self,
        module: &str,
        tags: &[String],
        name_glob: Option<&str>,
    ) -> Result<Vec<ComponentRef>> {
        self.search_components_in(None, module, tags, name_glob)
    }

    /// Like [`search_components`](Self::search_components) but optionally
    /// restricted to one repository.
    pub fn search_components_in(
        &self,
        repo: Option<&str>,
        module: &str,
        tags: &[String],
        name_glob: Option<&str>,
    ) -> Result<Vec<ComponentRef>> {
        let query: BTreeSet<String> = tags
            .iter()
            .flat_map(|t| split_tags(t))
            .collect();
        let pattern = match name_glob {
            Some(g) => Some(
                glob::Pattern::new(g)
                    .map_err(|e| Error::generic(format!("bad pattern {g:?}: {e}")))?,
            ),
            None => None,
        };
        let mut out = Vec::new();
        for repo in self.repos_in_scope(repo)? {
            for name in self.list_data_names(&repo, module)? {
                if let Some(p) = &pattern {
                    if !p.matches(&name) {
                        continue;
                    }
                }
                if !query.is_empty() {
                    let component = self.read_component(&repo, module, &name)?;
                    if !query.is_subset(&component.tags()) {
                        continue;
                    }
                }
                out.push(ComponentRef::in_repo(&repo.name, module, &name));
            }
        }
        Ok(out)
    }

    /// Duplicate payload and documents under a new name. The copy gets a
    /// fresh UID; the component's `tmp/` scratch directory is not copied.
    pub fn copy_component(&self, src: &ComponentRef, dst: &ComponentRef) -> Result<Component> {
        let source = self.load_component(src)?;
        let dst_data = dst.required_data()?;
        if !valid_name(dst_data) {
            return Err(Error::generic(format!(
                "invalid data name {dst_data:?}: allowed charset is [a-z0-9._-]"
            )));
        }
        let dst_module = if dst.module.is_empty() { &source.module_name } else { &dst.module };
        let repo = self.writable_repo(dst.repo.as_deref())?;
        let _guard = self.repo_lock(&repo)?;
        let dst_dir = Self::component_dir(&repo, dst_module, dst_data);
        if dst_dir.exists() {
            return Err(Error::generic(format!(
                "entry already exists: {}:{dst_module}:{dst_data}",
                repo.name
            )));
        }
        copy_payload(&source.payload_dir, &dst_dir)?;
        let uid = Uid::generate();
        let cm = dst_dir.join(META_DIR);
        jsonio::write_json(&cm.join("meta.json"), &source.meta)?;
        jsonio::write_json(&cm.join("info.json"), &source.info)?;
        jsonio::write_json(&cm.join("meta-lock.json"), &json!({ "uid": uid }))?;
        Ok(Component {
            repo_name: repo.name,
            module_name: dst_module.clone(),
            data_name: dst_data.to_string(),
            uid,
            meta: source.meta,
            info: source.info,
            payload_dir: dst_dir,
        })
    }

    /// Change a component's alias. The UID is untouched.
    pub fn rename_component(&self, src: &ComponentRef, new_name: &str) -> Result<Component> {
        if !valid_name(new_name) {
            return Err(Error::generic(format!(
                "invalid data name {new_name:?}: allowed charset is [a-z0-9._-]"
            )));
        }
        let source = self.load_component(src)?;
        let repo = self.writable_repo(Some(&source.repo_name))?;
        let _guard = self.repo_lock(&repo)?;
        let dst_dir = Self::component_dir(&repo, &source.module_name, new_name);
        if dst_dir.exists() {
            return Err(Error::generic(format!(
                "entry already exists: {}:{}:{new_name}",
                repo.name, source.module_name
            )));
        }
        std::fs::rename(&source.payload_dir, &dst_dir).map_err(|e| Error::io_at(&dst_dir, e))?;
        self.read_component(&repo, &source.module_name, new_name)
    }

    /// Delete a component's directory subtree.
    pub fn remove_component(&self, reference: &ComponentRef) -> Result<()> {
        let component = self.load_component(reference)?;
        let repo = self.writable_repo(Some(&component.repo_name))?;
        let _guard = self.repo_lock(&repo)?;
        std::fs::remove_dir_all(&component.payload_dir)
            .map_err(|e| Error::io_at(&component.payload_dir, e))?;
        Ok(())
    }

    /// Overwrite a component's meta document in place (same UID, same
    /// alias). Used by detection to update an existing env entry.
    pub fn update_meta(&self, reference: &ComponentRef, meta: Value) -> Result<Component> {
        let component = self.load_component(reference)?;
        let repo = self.writable_repo(Some(&component.repo_name))?;
        let _guard = self.repo_lock(&repo)?;
        jsonio::write_json(
            &component.payload_dir.join(META_DIR).join("meta.json"),
            &meta,
        )?;
        Ok(Component { meta, ..component })
    }
}

fn uid_from_descriptor(doc: &Value, path: &Path) -> Result<Uid> {
    doc.get("uid")
        .and_then(Value::as_str)
        .map(Uid::parse)
        .transpose()?
        .ok_or_else(|| Error::generic(format!("{}: missing or invalid uid", path.display())))
}

/// Copy a component payload, skipping the `tmp/` scratch directory and the
/// `.cm` documents (rewritten by the caller).
fn copy_payload(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io_at(dst, e))?;
    for entry in std::fs::read_dir(src).map_err(|e| Error::io_at(src, e))? {
        let entry = entry.map_err(|e| Error::io_at(src, e))?;
        let name = entry.file_name();
        if name == META_DIR || name == TMP_DIR {
            continue;
        }
        let from = entry.path();
        let to = dst.join(&name);
        if from.is_dir() {
            copy_tree(&from, &to)?;
        } else {
            std::fs::copy(&from, &to).map_err(|e| Error::io_at(&from, e))?;
        }
    }
    Ok(())
}

fn copy_tree(src: &Path, dst: &Path) -> Result<()> {
    std::fs::create_dir_all(dst).map_err(|e| Error::io_at(dst, e))?;
    for entry in walkdir::WalkDir::new(src).min_depth(1) {
        let entry = entry.map_err(|e| Error::io(format!("{}: {e}", src.display())))?;
        let rel = entry
            .path()
            .strip_prefix(src)
            .expect("walkdir yields paths under the root");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&target).map_err(|e| Error::io_at(&target, e))?;
        } else {
            std::fs::copy(entry.path(), &target).map_err(|e| Error::io_at(entry.path(), e))?;
        }
    }
    Ok(())
}

/// A repository source staged in a local directory ready to copy.
struct StagedRepo {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

/// Fetch/unpack a repository source: a local directory, a zip/tar archive
/// (optionally gzipped), or an http(s)/file URL pointing at one.
fn stage_repo_source(source: &str) -> Result<StagedRepo> {
    let local: PathBuf = if let Some(rest) = source.strip_prefix("file://") {
        PathBuf::from(rest)
    } else if source.starts_with("http://") || source.starts_with("https://") {
        let tmp = tempfile::tempdir().map_err(Error::from)?;
        let archive = tmp.path().join(url_file_name(source));
        download(source, &archive)?;
        let root = unpack_archive(&archive, tmp.path())?;
        return Ok(StagedRepo {
            root,
            _tmp: Some(tmp),
        });
    } else {
        PathBuf::from(source)
    };

    if local.is_dir() {
        return Ok(StagedRepo {
            root: local,
            _tmp: None,
        });
    }
    if local.is_file() {
        let tmp = tempfile::tempdir().map_err(Error::from)?;
        let root = unpack_archive(&local, tmp.path())?;
        return Ok(StagedRepo {
            root,
            _tmp: Some(tmp),
        });
    }
    Err(Error::not_found(format!("{source}: no such file or directory")))
}

fn url_file_name(url: &str) -> String {
    url.rsplit('/')
        .next()
        .filter(|s| !s.is_empty())
        .unwrap_or("archive")
        .to_string()
}

fn download(url: &str, dest: &Path) -> Result<()> {
    let response = ureq::get(url)
        .timeout(std::time::Duration::from_secs(60))
        .call()
        .map_err(|e| Error::io(format!("{url}: {e}")))?;
    let mut reader = response.into_reader();
    let mut file = std::fs::File::create(dest).map_err(|e| Error::io_at(dest, e))?;
    std::io::copy(&mut reader, &mut file).map_err(|e| Error::io_at(dest, e))?;
    Ok(())
}

/// Unpack a `.zip`, `.tar`, `.tar.gz` or `.tgz` archive into `dest`.
pub(crate) fn unpack_into(archive: &Path, dest: &Path) -> Result<()> {
    let name = archive
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_lowercase();
    std::fs::create_dir_all(dest).map_err(|e| Error::io_at(dest, e))?;
    if name.ends_with(".zip") {
        let file = std::fs::File::open(archive).map_err(|e| Error::io_at(archive, e))?;
        let mut zip = zip::ZipArchive::new(file)
            .map_err(|e| Error::generic(format!("{}: {e}", archive.display())))?;
        zip.extract(dest)
            .map_err(|e| Error::generic(format!("{}: {e}", archive.display())))?;
    } else if name.ends_with(".tar.gz") || name.ends_with(".tgz") {
        let file = std::fs::File::open(archive).map_err(|e| Error::io_at(archive, e))?;
        let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(file));
        tar.unpack(dest)
            .map_err(|e| Error::generic(format!("{}: {e}", archive.display())))?;
    } else if name.ends_with(".tar") {
        let file = std::fs::File::open(archive).map_err(|e| Error::io_at(archive, e))?;
        let mut tar = tar::Archive::new(file);
        tar.unpack(dest)
            .map_err(|e| Error::generic(format!("{}: {e}", archive.display())))?;
    } else {
        return Err(Error::generic(format!(
            "{}: unsupported archive type (expected .zip, .tar, .tar.gz)",
            archive.display()
        )));
    }
    Ok(())
}

/// Unpack an archive and return the directory containing `.ckr.json` (the
/// archive root, or the single top-level directory that GitHub-style
/// archives use).
fn unpack_archive(archive: &Path, dest: &Path) -> Result<PathBuf> {
    let out = dest.join("unpacked");
    unpack_into(archive, &out)?;

    if out.join(REPO_DESCRIPTOR).is_file() {
        return Ok(out);
    }
    let entries: Vec<_> = std::fs::read_dir(&out)
        .map_err(|e| Error::io_at(&out, e))?
        .filter_map(|e| e.ok())
        .collect();
    if entries.len() == 1 && entries[0].path().is_dir() {
        return Ok(entries[0].path());
    }
    Ok(out)
}

/// Stable modules shipped with the tool: data-only `module/<name>`
/// components holding one-line action help for `list_actions`.
fn populate_default_repo(repo_path: &Path) -> Result<()> {
    let modules: &[(&str, &str, &[(&str, &str)])] = &[
        ("repo", "Shareable repository of components", &[
            ("pull", "Fetch and register a repository from a directory, archive or URL"),
        ]),
        ("module", "Category descriptor with action help", &[]),
        ("program", "Buildable and runnable workload with declared dependencies", &[
            ("compile", "Resolve dependencies and build the program"),
            ("run", "Execute a named command of the program"),
            ("benchmark", "Build, run repeatedly and record an experiment point"),
            ("autotune", "Sweep exposed choices and report the efficient frontier"),
        ]),
        ("experiment", "Recorded results with full configuration", &[
            ("replay", "Re-run a recorded point and compare metrics"),
            ("report", "Write a JSON and HTML report for a record"),
        ]),
        ("env", "Resolved software installation usable by programs", &[]),
        ("package", "Recipe to fetch, verify and install missing software", &[
            ("install", "Fetch, verify and install a package"),
        ]),
        ("soft", "Detection rules for software already on the host", &[
            ("detect", "Probe the host for matching installations"),
        ]),
        ("dataset", "Input data wrapped as a component", &[]),
    ];
    for (name, desc, actions) in modules {
        let dir = repo_path.join("module").join(name).join(META_DIR);
        let mut action_map = Map::new();
        for (action, help) in *actions {
            action_map.insert(action.to_string(), json!(help));
        }
        jsonio::write_json(
            &dir.join("meta.json"),
            &json!({ "desc": desc, "actions": action_map }),
        )?;
        jsonio::write_json(
            &dir.join("info.json"),
            &json!({ "created_iso8601": now_iso8601() }),
        )?;
        jsonio::write_json(&dir.join("meta-lock.json"), &json!({ "uid": Uid::generate() }))?;
    }

    // Detection rules for tools commonly present on development hosts.
    let plugins = [
        (
            "shell-bash",
            json!({
                "name": "Bourne-again shell",
                "tags": "shell,bash,interpreter",
                "probe_commands": [{"exe": "bash", "version_arg": "--version"}],
                "version_regex": "version (\\d+\\.\\d+(?:\\.\\d+)?)",
                "env_template": {"CK_ENV_SHELL": "{path}", "CK_ENV_SHELL_VERSION": "{version}"}
            }),
        ),
        (
            "compiler-gcc",
            json!({
                "name": "GNU C compiler",
                "tags": "compiler,lang-c,gcc",
                "probe_commands": [{"exe": "gcc", "version_arg": "--version"}],
                "version_regex": "(\\d+\\.\\d+\\.\\d+)",
                "env_template": {"CK_ENV_COMPILER_GCC": "{path}", "CK_ENV_COMPILER_GCC_DIR": "{dir}"}
            }),
        ),
        (
            "python3",
            json!({
                "name": "Python 3 interpreter",
                "tags": "interpreter,python,lang-python",
                "probe_commands": [{"exe": "python3", "version_arg": "--version"}],
                "version_regex": "Python (\\d+\\.\\d+\\.\\d+)",
                "env_template": {"CK_ENV_PYTHON": "{path}"}
            }),
        ),
    ];
    for (name, meta) in plugins {
        let dir = repo_path.join("soft").join(name).join(META_DIR);
        jsonio::write_json(&dir.join("meta.json"), &meta)?;
        jsonio::write_json(
            &dir.join("info.json"),
            &json!({ "created_iso8601": now_iso8601() }),
        )?;
        jsonio::write_json(&dir.join("meta-lock.json"), &json!({ "uid": Uid::generate() }))?;
    }
    Ok(())
}
