//! Library backing the `cramfuse` experiment runner: config loading with
//! `--set` overrides, the individual commands, and the CSV/SVG writers.
//!
//! Every command is deterministic given its seeds; re-running a command
//! with the same configuration produces byte-identical files, except for
//! the documented timing outputs (`timing.json` and latency CSV columns).

pub mod commands;
pub mod config;
pub mod svg;
