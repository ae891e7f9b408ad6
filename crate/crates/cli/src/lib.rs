//! File formats, configuration, and experiment commands behind the
//! `morphsnn` binary.

pub mod commands;
pub mod config;
pub mod format;
