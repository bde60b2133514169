//! Command-line companion to `eec-core`: on-disk formats (masks, feature
//! streams, manifests), JSONL reporting, and the `eec` binary's subcommands.

pub mod commands;
pub mod formats;
pub mod manifest;
pub mod report;

pub use commands::dispatch;
