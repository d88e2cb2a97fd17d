//! Implementation crate behind the `prism` binary: argument structs, the
//! per-command entry points, and the shared loading/estimation plumbing.
//! Exposed as a library so integration tests can drive commands in-process.

pub mod commands;
pub mod common;
