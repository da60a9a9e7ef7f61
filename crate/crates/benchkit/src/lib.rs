//! benchkit organizes performance-engineering projects as a file-based
//! database of reusable components with unified automation actions.
//!
//! A *repository* is a plain directory tree described by `.ckr.json`;
//! every artifact in it (a program, a dataset, a detection rule, a
//! package recipe, an experiment record) is a *component*: a
//! `<module>/<data>` directory wrapping the payload together with
//! `.cm/meta.json` and `.cm/info.json` documents and an immutable UID
//! that survives renames. On top of that database sit:
//!
//! - [`registry`] — repository management and component CRUD with
//!   UID/alias addressing and tag search;
//! - [`action`] — the unified map-in/map-out action dispatch with the
//!   numeric return-code convention (`return > 0` means failure);
//! - [`detect`] — declarative detection of software already installed on
//!   the host, registered as `env` components;
//! - [`package`] — dependency resolution by tags and version windows,
//!   plus declarative installation of what is missing;
//! - [`pipeline`] — the portable build/run/benchmark flow with
//!   environment layering and metric collection;
//! - [`experiment`] — append-only experiment records, replay with metric
//!   and dependency comparison, and Pareto-frontier selection;
//! - [`tuner`] — design-space exploration over exposed choices;
//! - [`report`] — static JSON/HTML reports for experiment records;
//! - [`cli`] — the natural-language-style command grammar
//!   (`<action> <module>[:<data>] (flags) (@input.json)`).
//!
//! The `benchkit` binary is a thin wrapper over [`cli::run`]; everything
//! it can do is available as a library call. The runnable examples under
//! `examples/` walk through each capability:
//!
//! ```bash
//! cargo run --example registry_basics
//! cargo run --example software_detection
//! cargo run --example dependency_resolution
//! cargo run --example build_and_run
//! cargo run --example benchmark_record_replay
//! cargo run --example autotune_sweep
//! cargo run --example pareto_report
//! ```

pub mod action;
pub mod cli;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod jsonio;
pub mod lockfile;
pub mod package;
pub mod pipeline;
pub mod platform;
pub mod registry;
pub mod report;
pub mod tuner;

pub use action::{ActionRequest, ActionResult, Engine};
pub use error::{Error, Result};
pub use registry::{Component, ComponentRef, Registry, Uid};
